//! Flat square torus domain with a spin structure.
//!
//! Vertices sit on a periodic `n x n` grid with spacing `h = side_length / n`;
//! vertex `(i, j)` has flat index `i + n * j` and position `(i h, j h)`.
//! Every integral uses the lumped weight `h^2` per vertex.
//!
//! Scalar calculus uses central differences (`grad`) and their exact negative
//! adjoint (`div`). Map energies use the one-sided edge differences exposed by
//! [`SurfaceDomain::forward`] and friends, which have only constants in their
//! kernel.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identification of spinors across one periodic seam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Twist {
    Periodic,
    Antiperiodic,
}

impl Twist {
    pub fn sign(self) -> f64 {
        match self {
            Twist::Periodic => 1.0,
            Twist::Antiperiodic => -1.0,
        }
    }

    /// Fractional offset of admissible frequencies: 0 or 1/2.
    pub fn offset(self) -> f64 {
        match self {
            Twist::Periodic => 0.0,
            Twist::Antiperiodic => 0.5,
        }
    }

    pub fn from_sign(s: i32) -> Option<Self> {
        match s {
            1 => Some(Twist::Periodic),
            -1 => Some(Twist::Antiperiodic),
            _ => None,
        }
    }
}

/// One of the four spin structures of the flat torus, as a sign per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpinStructure {
    pub x: Twist,
    pub y: Twist,
}

impl SpinStructure {
    pub const fn new(x: Twist, y: Twist) -> Self {
        Self { x, y }
    }

    pub fn from_signs(sx: i32, sy: i32) -> Result<Self> {
        let x = Twist::from_sign(sx)
            .ok_or_else(|| Error::config("spin_structure", format!("sign must be +1 or -1, got {sx}")))?;
        let y = Twist::from_sign(sy)
            .ok_or_else(|| Error::config("spin_structure", format!("sign must be +1 or -1, got {sy}")))?;
        Ok(Self { x, y })
    }

    pub fn all() -> [SpinStructure; 4] {
        use Twist::*;
        [
            Self::new(Periodic, Periodic),
            Self::new(Antiperiodic, Periodic),
            Self::new(Periodic, Antiperiodic),
            Self::new(Antiperiodic, Antiperiodic),
        ]
    }

    pub fn axis(&self, axis: usize) -> Twist {
        if axis == 0 {
            self.x
        } else {
            self.y
        }
    }

    pub fn signs(&self) -> [i32; 2] {
        [self.x.sign() as i32, self.y.sign() as i32]
    }
}

impl fmt::Display for SpinStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |t: Twist| if t == Twist::Periodic { '+' } else { '-' };
        write!(f, "({},{})", c(self.x), c(self.y))
    }
}

/// Serializable description of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub n: usize,
    pub side_length: f64,
    pub spin_structure: SpinStructure,
}

#[derive(Clone)]
pub(crate) struct FftPair {
    pub forward: Arc<dyn Fft<f64>>,
    pub inverse: Arc<dyn Fft<f64>>,
}

/// Periodic grid on the flat torus `R^2 / (side_length Z)^2`.
#[derive(Clone)]
pub struct SurfaceDomain {
    n: usize,
    side_length: f64,
    spin: SpinStructure,
    fwd: [Vec<usize>; 2],
    bwd: [Vec<usize>; 2],
    fft: OnceLock<FftPair>,
}

impl fmt::Debug for SurfaceDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SurfaceDomain")
            .field("n", &self.n)
            .field("side_length", &self.side_length)
            .field("spin", &self.spin)
            .finish()
    }
}

impl PartialEq for SurfaceDomain {
    fn eq(&self, other: &Self) -> bool {
        self.spec() == other.spec()
    }
}

impl SurfaceDomain {
    pub fn new(n: usize, side_length: f64, spin: SpinStructure) -> Result<Self> {
        if n < 4 {
            return Err(Error::config("n", format!("grid resolution must be at least 4, got {n}")));
        }
        if !(side_length > 0.0) || !side_length.is_finite() {
            return Err(Error::config(
                "side_length",
                format!("side length must be positive and finite, got {side_length}"),
            ));
        }
        let count = n * n;
        let mut fwd = [vec![0; count], vec![0; count]];
        let mut bwd = [vec![0; count], vec![0; count]];
        for j in 0..n {
            for i in 0..n {
                let v = i + n * j;
                fwd[0][v] = (i + 1) % n + n * j;
                bwd[0][v] = (i + n - 1) % n + n * j;
                fwd[1][v] = i + n * ((j + 1) % n);
                bwd[1][v] = i + n * ((j + n - 1) % n);
            }
        }
        Ok(Self {
            n,
            side_length,
            spin,
            fwd,
            bwd,
            fft: OnceLock::new(),
        })
    }

    pub fn from_spec(spec: &DomainSpec) -> Result<Self> {
        Self::new(spec.n, spec.side_length, spec.spin_structure)
    }

    pub fn spec(&self) -> DomainSpec {
        DomainSpec {
            n: self.n,
            side_length: self.side_length,
            spin_structure: self.spin,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn spin_structure(&self) -> SpinStructure {
        self.spin
    }

    /// Same grid with a different spin structure.
    pub fn with_spin_structure(&self, spin: SpinStructure) -> Self {
        Self::new(self.n, self.side_length, spin).expect("validated at construction")
    }

    pub fn h(&self) -> f64 {
        self.side_length / self.n as f64
    }

    pub fn vertex_count(&self) -> usize {
        self.n * self.n
    }

    pub fn weight(&self) -> f64 {
        let h = self.h();
        h * h
    }

    pub fn area(&self) -> f64 {
        self.side_length * self.side_length
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        (i % self.n) + self.n * (j % self.n)
    }

    pub fn coords(&self, v: usize) -> (usize, usize) {
        (v % self.n, v / self.n)
    }

    pub fn position(&self, v: usize) -> [f64; 2] {
        let (i, j) = self.coords(v);
        let h = self.h();
        [i as f64 * h, j as f64 * h]
    }

    /// Neighbour of `v` one step forward along `axis`.
    #[inline]
    pub fn forward(&self, v: usize, axis: usize) -> usize {
        self.fwd[axis][v]
    }

    #[inline]
    pub fn backward(&self, v: usize, axis: usize) -> usize {
        self.bwd[axis][v]
    }

    /// Whether stepping forward from `v` along `axis` crosses the seam.
    #[inline]
    pub fn wraps_forward(&self, v: usize, axis: usize) -> bool {
        let (i, j) = self.coords(v);
        let c = if axis == 0 { i } else { j };
        c == self.n - 1
    }

    #[inline]
    pub fn wraps_backward(&self, v: usize, axis: usize) -> bool {
        let (i, j) = self.coords(v);
        let c = if axis == 0 { i } else { j };
        c == 0
    }

    /// Spinor sign picked up when stepping forward from `v` along `axis`.
    #[inline]
    pub fn spinor_sign_forward(&self, v: usize, axis: usize) -> f64 {
        if self.wraps_forward(v, axis) {
            self.spin.axis(axis).sign()
        } else {
            1.0
        }
    }

    #[inline]
    pub fn spinor_sign_backward(&self, v: usize, axis: usize) -> f64 {
        if self.wraps_backward(v, axis) {
            self.spin.axis(axis).sign()
        } else {
            1.0
        }
    }

    /// Shortest periodic displacement from `a` to `b`.
    pub fn periodic_displacement(&self, a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
        let l = self.side_length;
        let wrap = |d: f64| d - l * (d / l).round();
        [wrap(b[0] - a[0]), wrap(b[1] - a[1])]
    }

    pub(crate) fn fft(&self) -> &FftPair {
        self.fft.get_or_init(|| {
            let mut planner = FftPlanner::new();
            FftPair {
                forward: planner.plan_fft_forward(self.n),
                inverse: planner.plan_fft_inverse(self.n),
            }
        })
    }

    fn check(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.vertex_count() {
            return Err(Error::Shape {
                what,
                expected: self.vertex_count(),
                found: len,
            });
        }
        Ok(())
    }

    /// Central-difference gradient of a scalar field.
    pub fn grad(&self, f: &ScalarField) -> Result<VectorField> {
        self.check("scalar field", f.len())?;
        let inv = 1.0 / (2.0 * self.h());
        let mut comps = [vec![0.0; f.len()], vec![0.0; f.len()]];
        for (axis, out) in comps.iter_mut().enumerate() {
            for (v, o) in out.iter_mut().enumerate() {
                *o = (f.0[self.forward(v, axis)] - f.0[self.backward(v, axis)]) * inv;
            }
        }
        let [x, y] = comps;
        Ok(VectorField([ScalarField(x), ScalarField(y)]))
    }

    /// Divergence defined as the negative adjoint of [`SurfaceDomain::grad`]
    /// under the vertex quadrature.
    pub fn div(&self, v: &VectorField) -> Result<ScalarField> {
        self.check("vector field", v.0[0].len())?;
        self.check("vector field", v.0[1].len())?;
        let inv = 1.0 / (2.0 * self.h());
        let mut out = vec![0.0; self.vertex_count()];
        for axis in 0..2 {
            let c = &v.0[axis].0;
            for (u, o) in out.iter_mut().enumerate() {
                *o += (c[self.forward(u, axis)] - c[self.backward(u, axis)]) * inv;
            }
        }
        Ok(ScalarField(out))
    }

    /// Vertex-lumped quadrature.
    pub fn integrate(&self, f: &ScalarField) -> Result<f64> {
        self.check("scalar field", f.len())?;
        Ok(self.integrate_slice(&f.0))
    }

    pub(crate) fn integrate_slice(&self, f: &[f64]) -> f64 {
        self.weight() * f.iter().sum::<f64>()
    }

    /// Shift a scalar field by one cell along `axis`: `out(v) = f(v - e_axis)`.
    pub fn shift(&self, f: &ScalarField, axis: usize) -> ScalarField {
        ScalarField((0..f.len()).map(|v| f.0[self.backward(v, axis)]).collect())
    }

    /// Sample a function of position on the grid.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField(
            (0..self.vertex_count())
                .map(|v| {
                    let [x, y] = self.position(v);
                    f(x, y)
                })
                .collect(),
        )
    }
}

/// Real scalar values, one per vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField(pub Vec<f64>);

impl ScalarField {
    pub fn zeros(domain: &SurfaceDomain) -> Self {
        Self(vec![0.0; domain.vertex_count()])
    }

    pub fn constant(domain: &SurfaceDomain, c: f64) -> Self {
        Self(vec![c; domain.vertex_count()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// A pair of scalar fields, one per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField(pub [ScalarField; 2]);

impl VectorField {
    /// Pointwise inner product with another vector field, integrated.
    pub fn pairing(&self, domain: &SurfaceDomain, other: &VectorField) -> f64 {
        let mut s = 0.0;
        for axis in 0..2 {
            s += self.0[axis]
                .0
                .iter()
                .zip(&other.0[axis].0)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        s * domain.weight()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn dom(n: usize, l: f64) -> SurfaceDomain {
        SurfaceDomain::new(n, l, SpinStructure::new(Twist::Periodic, Twist::Periodic)).unwrap()
    }

    #[test]
    fn build_domain_examples() {
        let d = dom(16, 1.0);
        assert_eq!(d.vertex_count(), 256);
        assert_eq!(d.h(), 0.0625);
        let d = SurfaceDomain::new(4, 2.0, SpinStructure::from_signs(-1, -1).unwrap()).unwrap();
        assert_eq!(d.vertex_count(), 16);
        assert_eq!(d.h(), 0.5);
        assert!(matches!(
            SurfaceDomain::new(3, 1.0, SpinStructure::from_signs(1, 1).unwrap()),
            Err(Error::Config { .. })
        ));
        assert!(SurfaceDomain::new(8, 0.0, SpinStructure::from_signs(1, 1).unwrap()).is_err());
        assert!(SpinStructure::from_signs(2, 1).is_err());
    }

    #[test]
    fn grad_of_constant_vanishes() {
        let d = dom(8, 1.3);
        let g = d.grad(&ScalarField::constant(&d, 2.5)).unwrap();
        assert!(g.0[0].max_abs() == 0.0 && g.0[1].max_abs() == 0.0);
    }

    #[test]
    fn grad_of_sine_is_second_order() {
        let err = |n: usize| {
            let d = dom(n, 1.0);
            let f = d.sample(|x, _| (2.0 * PI * x).sin());
            let g = d.grad(&f).unwrap();
            let exact = d.sample(|x, _| 2.0 * PI * (2.0 * PI * x).cos());
            g.0[0]
                .0
                .iter()
                .zip(&exact.0)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        };
        let (e64, e128) = (err(64), err(128));
        let h = 1.0 / 64.0;
        assert!(e64 <= 50.0 * h * h, "{e64}");
        let ratio = e64 / e128;
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn div_of_grad_matches_laplacian() {
        let err = |n: usize| {
            let d = dom(n, 1.0);
            let f = d.sample(|x, _| (2.0 * PI * x).sin());
            let lap = d.div(&d.grad(&f).unwrap()).unwrap();
            let exact = d.sample(|x, _| -(2.0 * PI).powi(2) * (2.0 * PI * x).sin());
            lap.0
                .iter()
                .zip(&exact.0)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        };
        let ratio = err(32) / err(64);
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
        let d = dom(8, 1.0);
        let z = VectorField([ScalarField::zeros(&d), ScalarField::zeros(&d)]);
        assert_eq!(d.div(&z).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn grad_div_adjointness() {
        let d = dom(12, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = ScalarField((0..d.vertex_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let v = VectorField([
            ScalarField((0..d.vertex_count()).map(|_| rng.random_range(-1.0..1.0)).collect()),
            ScalarField((0..d.vertex_count()).map(|_| rng.random_range(-1.0..1.0)).collect()),
        ]);
        let lhs = v.pairing(&d, &d.grad(&f).unwrap());
        let div = d.div(&v).unwrap();
        let rhs = d.integrate(&ScalarField(div.0.iter().zip(&f.0).map(|(a, b)| a * b).collect())).unwrap();
        let nv = v.pairing(&d, &v).sqrt();
        let nf = d.integrate(&ScalarField(f.0.iter().map(|x| x * x).collect())).unwrap().sqrt();
        assert!((lhs + rhs).abs() <= 1e-12 * nv * nf);
    }

    #[test]
    fn integrate_examples() {
        let d = dom(8, 1.0);
        assert!((d.integrate(&ScalarField::constant(&d, 1.0)).unwrap() - 1.0).abs() < 1e-15);
        let d = dom(8, 2.0);
        assert!((d.integrate(&ScalarField::constant(&d, 3.0)).unwrap() - 12.0).abs() < 1e-13);
        let d = dom(32, 1.0);
        let f = d.sample(|x, _| (2.0 * PI * x).sin().powi(2));
        assert!((d.integrate(&f).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let d = dom(8, 1.0);
        let bad = ScalarField(vec![0.0; 10]);
        assert!(matches!(d.grad(&bad), Err(Error::Shape { expected: 64, found: 10, .. })));
        assert!(d.integrate(&bad).is_err());
    }

    #[test]
    fn translation_equivariance() {
        let d = dom(10, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = ScalarField((0..d.vertex_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
        for axis in 0..2 {
            let sf = d.shift(&f, axis);
            let g_shift = d.grad(&sf).unwrap();
            let shift_g = d.grad(&f).unwrap();
            for c in 0..2 {
                assert_eq!(g_shift.0[c], d.shift(&shift_g.0[c], axis));
            }
            let vf = VectorField([f.clone(), sf.clone()]);
            let vs = VectorField([d.shift(&f, axis), d.shift(&sf, axis)]);
            assert_eq!(d.div(&vs).unwrap(), d.shift(&d.div(&vf).unwrap(), axis));
            assert!((d.integrate(&sf).unwrap() - d.integrate(&f).unwrap()).abs() < 1e-14);
        }
    }
}
