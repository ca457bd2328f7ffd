//! Critical points of the perturbed action: alpha-energy minimization,
//! mountain-pass initialization along `e+`, Newton correction of the
//! coupled Euler-Lagrange system, the negative pseudo-gradient flow, and
//! continuation in `alpha` and `k`.

use std::collections::VecDeque;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::domain::SurfaceDomain;
use crate::error::{Error, Result};
use crate::functional::{self as fun, ActionConfig, ActionValue, MapField, ResidualNorms, TangentField};
use crate::krylov::gmres;
use crate::spectral::{self, SpectralData};
use crate::spin::{self, PlainSpinorField};
use crate::target::{transport_spinor, winding_of, HomotopyClass, TargetManifold};

/// Knobs shared by the minimizer, Newton and the flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Bound on the combined residual norm.
    pub grad_tol: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub lbfgs_memory: usize,
    pub newton_max_iters: usize,
    /// Smallest Newton damping factor tried before giving up.
    pub newton_min_damping: f64,
    pub gmres_restart: usize,
    pub gmres_max_iters: usize,
    /// Relative step of the finite-difference Jacobian-vector products.
    pub fd_step: f64,
    /// Largest vertex displacement per step, as a fraction of the
    /// injectivity radius.
    pub step_cap: f64,
    pub flow_dt: f64,
    pub flow_horizon: f64,
    pub flow_max_rejections: usize,
    /// Pseudo-gradient constant `a`, strictly inside (1, 2).
    pub pseudo_gradient_a: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            grad_tol: 1e-8,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
            lbfgs_memory: 10,
            newton_max_iters: 40,
            newton_min_damping: 1.0 / 1024.0,
            gmres_restart: 80,
            gmres_max_iters: 1200,
            fd_step: 1e-6,
            step_cap: 0.25,
            flow_dt: 0.05,
            flow_horizon: 1.0,
            flow_max_rejections: 40,
            pseudo_gradient_a: 1.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let a = self.pseudo_gradient_a;
        if !(a > 1.0 && a < 2.0) {
            return Err(Error::config("solver.pseudo_gradient_a", format!("a must lie strictly inside (1, 2), got {a}")));
        }
        let positive = [
            ("solver.grad_tol", self.grad_tol),
            ("solver.fd_step", self.fd_step),
            ("solver.flow_dt", self.flow_dt),
            ("solver.newton_min_damping", self.newton_min_damping),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        if !(self.flow_horizon >= 0.0 && self.flow_horizon.is_finite()) {
            return Err(Error::config("solver.flow_horizon", "horizon must be finite and nonnegative"));
        }
        if !(self.step_cap > 0.0 && self.step_cap <= 1.0) {
            return Err(Error::config("solver.step_cap", "step cap must lie in (0, 1]"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::config("solver.backtrack", "backtracking factor must lie in (0, 1)"));
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            return Err(Error::config("solver.armijo", "Armijo constant must lie in (0, 1/2)"));
        }
        for (key, v) in [
            ("solver.max_iters", self.max_iters),
            ("solver.lbfgs_memory", self.lbfgs_memory),
            ("solver.newton_max_iters", self.newton_max_iters),
            ("solver.gmres_restart", self.gmres_restart),
            ("solver.gmres_max_iters", self.gmres_max_iters),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalKind {
    Minimizer,
    SaddleCandidate,
}

/// Short record of the spectrum at a critical point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub eigenvalues: Vec<f64>,
    pub kernel_dimension: usize,
    pub lambda_plus: Option<f64>,
}

impl From<&SpectralData> for SpectralSummary {
    fn from(d: &SpectralData) -> Self {
        Self {
            eigenvalues: d.eigenvalues.clone(),
            kernel_dimension: d.kernel_dimension(),
            lambda_plus: d.lambda_plus,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub phi: MapField,
    pub psi: PlainSpinorField,
    pub action: ActionValue,
    pub residuals: ResidualNorms,
    pub spectral: Option<SpectralSummary>,
    pub kind: CriticalKind,
    /// Class recomputed from the vertex values.
    pub class: HomotopyClass,
    pub converged: bool,
    pub nontrivial: bool,
    pub iterations: usize,
    /// Residual norm after every iteration.
    pub history: Vec<f64>,
}

fn check_class(domain: &SurfaceDomain, phi: &MapField) -> Result<HomotopyClass> {
    let found = winding_of(domain, phi)?;
    if found != phi.class {
        return Err(Error::ClassMismatch {
            expected: phi.class.to_string(),
            found: found.to_string(),
        });
    }
    Ok(found)
}

fn max_vertex_norm(x: &[f64], l: usize) -> f64 {
    x.chunks(l)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn step_limit(phi: &MapField, cfg: &SolverConfig) -> f64 {
    cfg.step_cap * phi.target.injectivity_radius()
}

fn lbfgs_direction(domain: &SurfaceDomain, g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * fun::tangent_dot(domain, s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = fun::tangent_dot(domain, s, y) / fun::tangent_dot(domain, y, y);
        q.iter_mut().for_each(|x| *x *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * fun::tangent_dot(domain, y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

fn energy_gradient(domain: &SurfaceDomain, phi: &MapField, alpha: f64) -> TangentField {
    phi.project_tangent_field(&fun::alpha_energy_gradient(domain, phi, alpha))
}

/// Riemannian L-BFGS on `E^alpha` with vertexwise retraction, projection
/// as vector transport and Armijo backtracking.
pub fn minimize_alpha_energy(domain: &SurfaceDomain, phi0: &MapField, alpha: f64, cfg: &SolverConfig) -> Result<CriticalPoint> {
    cfg.validate()?;
    if !(alpha >= 1.0 && alpha <= 2.0) {
        return Err(Error::config("alpha", format!("alpha must lie in [1, 2], got {alpha}")));
    }
    check_class(domain, phi0)?;
    let l = phi0.ambient_dim();
    let cap = step_limit(phi0, cfg);
    let mut phi = phi0.clone();
    let mut e = fun::alpha_energy(domain, &phi, alpha);
    let mut g = energy_gradient(domain, &phi, alpha);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        let gn = fun::tangent_norm(domain, &g);
        history.push(gn);
        if gn <= cfg.grad_tol {
            converged = true;
            break;
        }
        iterations = it + 1;
        let mut d = lbfgs_direction(domain, &g, &hist);
        let mut slope = fun::tangent_dot(domain, &g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|x| -x).collect();
            slope = -gn * gn;
        }
        let mut t = 1.0f64.min(cap / max_vertex_norm(&d, l).max(f64::MIN_POSITIVE));
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let cand = phi.retract(domain, &d, t)?;
            let ec = fun::alpha_energy(domain, &cand, alpha);
            if ec <= e + cfg.armijo * t * slope {
                accepted = Some((cand, ec, None));
                break;
            }
            // Near convergence the decrease drops below round-off; accept a
            // step that keeps the energy level and shrinks the gradient.
            if ec <= e + 1e-13 * e.abs() {
                let gc = energy_gradient(domain, &cand, alpha);
                if fun::tangent_norm(domain, &gc) < gn {
                    accepted = Some((cand, ec, Some(gc)));
                    break;
                }
            }
            t *= cfg.backtrack;
        }
        let Some((cand, ec, gc)) = accepted else {
            return Err(Error::LineSearch { iteration: it, step: t });
        };
        check_class(domain, &cand)?;
        let g_new = gc.unwrap_or_else(|| energy_gradient(domain, &cand, alpha));
        let s = cand.project_tangent_field(&d.iter().map(|x| x * t).collect::<Vec<_>>());
        let g_old = cand.project_tangent_field(&g);
        let y: Vec<f64> = g_new.iter().zip(&g_old).map(|(a, b)| a - b).collect();
        for (hs, hy, _) in hist.iter_mut() {
            *hs = cand.project_tangent_field(hs);
            *hy = cand.project_tangent_field(hy);
        }
        let sy = fun::tangent_dot(domain, &s, &y);
        if sy > 1e-14 * fun::tangent_norm(domain, &s) * fun::tangent_norm(domain, &y) {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > cfg.lbfgs_memory {
                hist.pop_front();
            }
        }
        phi = cand;
        e = ec;
        g = g_new;
    }
    let class = check_class(domain, &phi)?;
    let psi = PlainSpinorField::zeros(domain, l);
    let gn = fun::tangent_norm(domain, &g);
    if !converged {
        return Err(Error::NotConverged(format!(
            "alpha-energy minimization stopped at gradient norm {gn:.3e} after {iterations} iterations"
        )));
    }
    Ok(CriticalPoint {
        phi,
        psi,
        action: ActionValue {
            total: e,
            alpha_energy: e,
            dirac_action: 0.0,
            perturbation: 0.0,
        },
        residuals: ResidualNorms {
            horizontal: gn,
            vertical: 0.0,
            combined: gn,
        },
        spectral: None,
        kind: CriticalKind::Minimizer,
        class,
        converged,
        nontrivial: false,
        iterations,
        history,
    })
}

/// Result of the ray search `r -> L(phi, r e+)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MountainPass {
    pub phi: MapField,
    pub psi: PlainSpinorField,
    /// Maximizing radius `r*`.
    pub radius: f64,
    /// Action at `r*`.
    pub height: f64,
    /// Action at `r = 0`.
    pub base: f64,
    /// Radius at which the profile was found to turn down.
    pub max_radius: f64,
}

const PROFILE_SAMPLES: usize = 32;
const PROFILE_EXPANSIONS: usize = 60;

/// Start the saddle search on the ray `{r e+}` at the maximizing radius.
pub fn mountain_pass_init(
    domain: &SurfaceDomain,
    minimizer: &CriticalPoint,
    spectral: &SpectralData,
    action_cfg: &ActionConfig,
) -> Result<MountainPass> {
    action_cfg.validate()?;
    let phi = &minimizer.phi;
    spectral.check_map(phi)?;
    let e = spectral.e_plus.as_ref().ok_or(Error::EmptyPositiveSubspace)?;
    let value = |r: f64| -> Result<f64> { Ok(fun::action(domain, phi, &e.scaled(r), action_cfg)?.total) };
    let slope = |r: f64| -> Result<f64> {
        let res = fun::vertical_residual(domain, phi, &e.scaled(r), action_cfg)?;
        Ok(e.dot_re(domain, &res))
    };
    let base = value(0.0)?;
    let mut r2 = 1.0;
    let mut crossings = Vec::new();
    for _ in 0..PROFILE_EXPANSIONS {
        let grid: Vec<f64> = (1..=PROFILE_SAMPLES).map(|i| r2 * i as f64 / PROFILE_SAMPLES as f64).collect();
        let slopes: Vec<f64> = grid.iter().map(|&r| slope(r)).collect::<Result<_>>()?;
        if slopes[0] <= 0.0 && crossings.is_empty() {
            // Check the profile right next to the origin before giving up.
            let tiny = slope(grid[0] * 1e-6)?;
            if tiny <= 0.0 {
                return Err(Error::ProfileNotIncreasing);
            }
        }
        let mut prev = (0.0, 1.0);
        for (&r, &s) in grid.iter().zip(&slopes) {
            if prev.1 > 0.0 && s <= 0.0 {
                crossings.push((prev.0, r));
            }
            prev = (r, s);
        }
        if !crossings.is_empty() && *slopes.last().expect("grid") < 0.0 {
            break;
        }
        crossings.clear();
        r2 *= 2.0;
    }
    if crossings.is_empty() {
        return Err(Error::NoTurnDown { radius: r2 });
    }
    let mut best: Option<(f64, f64)> = None;
    for (mut lo, mut hi) in crossings {
        for _ in 0..200 {
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if slope(mid)? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);
        let v = value(r)?;
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((r, v));
        }
    }
    let (radius, height) = best.expect("at least one crossing");
    if !(height > base) || radius <= 0.0 {
        return Err(Error::ProfileNotIncreasing);
    }
    Ok(MountainPass {
        phi: phi.clone(),
        psi: e.scaled(radius),
        radius,
        height,
        base,
        max_radius: r2,
    })
}

fn spinor_to_real(psi: &PlainSpinorField, out: &mut Vec<f64>) {
    for z in &psi.values {
        out.push(z.re);
        out.push(z.im);
    }
}

fn spinor_from_real(x: &[f64], ambient_dim: usize) -> PlainSpinorField {
    PlainSpinorField {
        ambient_dim,
        values: x.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect(),
    }
}

/// Coupled residual `(G_H, Pi(D psi - eps F_psi))` at `(phi, psi)`, carried
/// back to the tangent spaces along `base`.
fn residual_vector(
    domain: &SurfaceDomain,
    base: &MapField,
    phi: &MapField,
    psi: &PlainSpinorField,
    cfg: &ActionConfig,
) -> Result<Vec<f64>> {
    let gh = fun::horizontal_gradient(domain, phi, psi, cfg)?;
    let rv = fun::vertical_residual(domain, phi, psi, cfg)?;
    let mut out = if std::ptr::eq(base, phi) { gh } else { base.project_tangent_field(&gh) };
    let rv = if std::ptr::eq(base, phi) {
        rv
    } else {
        fun::project_spinor(domain, base, &transport_spinor(domain, phi, base, &rv)?)
    };
    spinor_to_real(&rv, &mut out);
    Ok(out)
}

/// Move `(phi, psi)` by `t (X, Y)`: retract the map, transport the spinor
/// and restore tangency.
fn displaced(
    domain: &SurfaceDomain,
    phi: &MapField,
    psi: &PlainSpinorField,
    x: &[f64],
    t: f64,
) -> Result<(MapField, PlainSpinorField)> {
    let nx = phi.values.len();
    let dx = phi.project_tangent_field(&x[..nx]);
    let dy = spinor_from_real(&x[nx..], psi.ambient_dim);
    let moved = phi.retract(domain, &dx, t)?;
    let mut p = psi.clone();
    p.axpy(t, &dy);
    let p = fun::project_spinor(domain, phi, &p);
    let p = transport_spinor(domain, phi, &moved, &p)?;
    let p = fun::project_spinor(domain, &moved, &p);
    Ok((moved, p))
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Damped inexact Newton on the coupled Euler-Lagrange system.
///
/// Linear solves use right-preconditioned GMRES with central-difference
/// Jacobian-vector products. On divergence the best iterate is returned
/// with `converged = false`.
pub fn newton_solve(
    domain: &SurfaceDomain,
    phi0: &MapField,
    psi0: &PlainSpinorField,
    action_cfg: &ActionConfig,
    cfg: &SolverConfig,
) -> Result<CriticalPoint> {
    cfg.validate()?;
    action_cfg.validate()?;
    check_class(domain, phi0)?;
    let l = phi0.ambient_dim();
    if psi0.ambient_dim != l {
        return Err(Error::Shape {
            what: "spinor ambient dimension",
            expected: l,
            found: psi0.ambient_dim,
        });
    }
    psi0.check(domain)?;
    let nx = phi0.values.len();
    let cap = step_limit(phi0, cfg);
    let shift = spectral::spectral_scale(domain).powi(2);
    let mut phi = phi0.clone();
    let mut psi = fun::project_spinor(domain, &phi, psi0);
    let mut norms = fun::residual_norms(domain, &phi, &psi, action_cfg)?;
    if !norms.combined.is_finite() {
        return Err(Error::NotConverged("initial residual is not finite".into()));
    }
    let mut best = (phi.clone(), psi.clone(), norms);
    let mut history = vec![norms.combined];
    let mut converged = norms.combined <= cfg.grad_tol;
    let mut iterations = 0;
    while !converged && iterations < cfg.newton_max_iters {
        iterations += 1;
        let r = residual_vector(domain, &phi, &phi, &psi, action_cfg)?;
        let scale = 1.0f64.max(psi.max_abs());
        let jv = |v: &[f64]| -> Vec<f64> {
            let vn = inf_norm(v);
            if vn == 0.0 {
                return vec![0.0; v.len()];
            }
            let h = cfg.fd_step * scale / vn;
            let eval = |t: f64| -> Result<Vec<f64>> {
                let (p, s) = displaced(domain, &phi, &psi, v, t)?;
                residual_vector(domain, &phi, &p, &s, action_cfg)
            };
            match (eval(h), eval(-h)) {
                (Ok(a), Ok(b)) => a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect(),
                _ => vec![f64::NAN; v.len()],
            }
        };
        let q = fun::energy_density(domain, &phi);
        let c0 = q.iter().map(|x| action_cfg.alpha * (1.0 + x).powf(action_cfg.alpha - 1.0)).sum::<f64>() / q.len() as f64;
        let precond = |z: &[f64]| -> Vec<f64> {
            let mut out = phi.project_tangent_field(&spin::periodic_multiplier(domain, &z[..nx], l, |lam| 1.0 / (c0 * (lam + shift))));
            let y = fun::project_spinor(domain, &phi, &spinor_from_real(&z[nx..], l));
            let y = spin::resolvent_precondition(domain, &y).expect("shape checked");
            spinor_to_real(&fun::project_spinor(domain, &phi, &y), &mut out);
            out
        };
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let forcing = norms.combined.clamp(1e-10, 1e-2);
        let (z, _) = gmres(|v| jv(&precond(v)), &rhs, forcing, cfg.gmres_restart, cfg.gmres_max_iters);
        let step = precond(&z);
        if step.iter().any(|x| !x.is_finite()) {
            break;
        }
        let mut t = 1.0f64.min(cap / max_vertex_norm(&step[..nx], l).max(f64::MIN_POSITIVE));
        let mut accepted = None;
        while t >= cfg.newton_min_damping {
            if let Ok((p, s)) = displaced(domain, &phi, &psi, &step, t) {
                if winding_of(domain, &p).ok() == Some(p.class) {
                    let n = fun::residual_norms(domain, &p, &s, action_cfg)?;
                    if n.combined < (1.0 - 1e-4 * t) * norms.combined {
                        accepted = Some((p, s, n));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((p, s, n)) = accepted else {
            break;
        };
        phi = p;
        psi = s;
        norms = n;
        history.push(norms.combined);
        if norms.combined < best.2.combined {
            best = (phi.clone(), psi.clone(), norms);
        }
        converged = norms.combined <= cfg.grad_tol;
    }
    let (phi, psi, norms) = best;
    let class = check_class(domain, &phi)?;
    let action = fun::action(domain, &phi, &psi, action_cfg)?;
    let nontrivial = psi.norm(domain) > 1e-8;
    Ok(CriticalPoint {
        phi,
        psi,
        action,
        residuals: norms,
        spectral: None,
        kind: if nontrivial { CriticalKind::SaddleCandidate } else { CriticalKind::Minimizer },
        class,
        converged,
        nontrivial,
        iterations,
        history,
    })
}

/// One accepted step of the pseudo-gradient flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub t: f64,
    pub action: f64,
    /// `||dL||` with the L2 horizontal and H^{-1/2} vertical dual norms.
    pub dl_norm: f64,
    pub omega_norm: f64,
    /// `2 ||dL|| - ||omega||`, nonnegative when the bound holds.
    pub norm_margin: f64,
    /// `dL(omega) - ||dL||^2`, nonnegative when the descent bound holds.
    pub descent_margin: f64,
    pub eta: f64,
    pub dt: f64,
    /// `eta dL(omega)`, the instantaneous rate of decrease.
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub records: Vec<FlowRecord>,
    pub phi: MapField,
    pub psi: PlainSpinorField,
    pub accepted: usize,
    pub rejections: usize,
    /// Steps at which either pseudo-gradient inequality failed.
    pub violations: usize,
    /// Accepted steps whose action rose beyond round-off.
    pub monotonicity_violations: usize,
    /// Why the flow stopped before the horizon, if it did.
    pub stopped: Option<String>,
}

impl FlowTrajectory {
    /// Actual decrease of the action over the run.
    pub fn decrease(&self) -> f64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => a.action - b.action,
            _ => 0.0,
        }
    }

    /// Trapezoidal quadrature of `eta dL(omega)` over the logged times.
    pub fn predicted_decrease(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| 0.5 * (w[0].rate + w[1].rate) * (w[1].t - w[0].t))
            .sum()
    }
}

const FLOW_LOCAL_TOL: f64 = 1e-2;

struct FlowState {
    action: f64,
    gh: TangentField,
    gv: PlainSpinorField,
    record: FlowRecord,
}

fn flow_state(
    domain: &SurfaceDomain,
    phi: &MapField,
    psi: &PlainSpinorField,
    action_cfg: &ActionConfig,
    a: f64,
    t: f64,
) -> Result<FlowState> {
    let action = fun::action(domain, phi, psi, action_cfg)?.total;
    let gh = fun::horizontal_gradient(domain, phi, psi, action_cfg)?;
    let rv = fun::vertical_residual(domain, phi, psi, action_cfg)?;
    let gv = spin::resolvent_precondition(domain, &rv)?;
    let dh = fun::tangent_norm(domain, &gh);
    let dv = spin::h_half_norm(domain, &gv)?;
    let dl = dh.hypot(dv);
    // X = (3/2) ||d^H|| * G_H / ||G_H|| = (3/2) G_H.
    let omega_h = 1.5 * dh;
    let omega_norm = omega_h.hypot(a * dv);
    let dl_omega = 1.5 * fun::tangent_dot(domain, &gh, &gh) + a * rv.dot_re(domain, &gv);
    let eta = if omega_norm > 1.0 { 1.0 / omega_norm } else { 1.0 };
    Ok(FlowState {
        action,
        gh,
        gv,
        record: FlowRecord {
            t,
            action,
            dl_norm: dl,
            omega_norm,
            norm_margin: 2.0 * dl - omega_norm,
            descent_margin: dl_omega - dl * dl,
            eta,
            dt: 0.0,
            rate: eta * dl_omega,
        },
    })
}

fn margins_ok(r: &FlowRecord) -> bool {
    let tol = 1e-12 * r.dl_norm.powi(2).max(f64::MIN_POSITIVE);
    r.norm_margin >= -1e-12 * r.dl_norm && r.descent_margin >= -tol
}

/// Explicit integration of `d/dt (phi, psi) = -eta omega` up to `horizon`,
/// with monotone acceptance, local error control on the decrease and
/// spinor transport per step. `flow_dt` is the largest step tried.
pub fn pseudo_gradient_flow(
    domain: &SurfaceDomain,
    phi0: &MapField,
    psi0: &PlainSpinorField,
    action_cfg: &ActionConfig,
    cfg: &SolverConfig,
    horizon: f64,
) -> Result<FlowTrajectory> {
    cfg.validate()?;
    action_cfg.validate()?;
    check_class(domain, phi0)?;
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::config("solver.flow_horizon", "horizon must be finite and nonnegative"));
    }
    let a = cfg.pseudo_gradient_a;
    let l = phi0.ambient_dim();
    let cap = step_limit(phi0, cfg);
    let mut phi = phi0.clone();
    let mut psi = fun::project_spinor(domain, &phi, psi0);
    let mut t = 0.0;
    let mut state = flow_state(domain, &phi, &psi, action_cfg, a, t)?;
    let mut traj = FlowTrajectory {
        records: Vec::new(),
        phi: phi.clone(),
        psi: psi.clone(),
        accepted: 0,
        rejections: 0,
        violations: usize::from(!margins_ok(&state.record)),
        monotonicity_violations: 0,
        stopped: None,
    };
    traj.records.push(state.record);
    let mut dt = cfg.flow_dt;
    let mut streak = 0;
    while t < horizon * (1.0 - 1e-12) {
        if state.record.dl_norm == 0.0 {
            traj.stopped = Some("exact critical point".into());
            break;
        }
        let eta = state.record.eta;
        let mut h = dt.min(horizon - t);
        let xh: Vec<f64> = state.gh.iter().map(|g| -1.5 * eta * g).collect();
        let vmax = max_vertex_norm(&xh, l);
        if vmax * h > cap {
            h = cap / vmax;
        }
        let moved = phi.retract(domain, &xh, h)?;
        let mut p = psi.clone();
        p.axpy(-h * eta * a, &state.gv);
        let p = fun::project_spinor(domain, &phi, &p);
        let p = fun::project_spinor(domain, &moved, &transport_spinor(domain, &phi, &moved, &p)?);
        let next = flow_state(domain, &moved, &p, action_cfg, a, t + h)?;
        let allowance = 10.0 * f64::EPSILON * state.action.abs();
        let class_ok = winding_of(domain, &moved).ok() == Some(moved.class);
        // Local error control: the realized decrease must match the
        // trapezoidal prediction of the rate integral.
        let predicted = 0.5 * (state.record.rate + next.record.rate) * h;
        let realized = state.action - next.action;
        let accurate = (realized - predicted).abs() <= FLOW_LOCAL_TOL * predicted.abs() + allowance;
        if next.action <= state.action + allowance && class_ok && accurate {
            t += h;
            phi = moved;
            psi = p;
            state = next;
            state.record.dt = h;
            if !margins_ok(&state.record) {
                traj.violations += 1;
            }
            traj.records.push(state.record);
            traj.accepted += 1;
            streak = 0;
            dt = (2.0 * dt).min(cfg.flow_dt);
        } else {
            traj.rejections += 1;
            streak += 1;
            dt *= 0.5;
            if streak > cfg.flow_max_rejections {
                traj.stopped = Some(Error::StepRejection { rejections: streak, time: t }.to_string());
                break;
            }
        }
    }
    traj.monotonicity_violations = traj
        .records
        .windows(2)
        .filter(|w| w[1].action > w[0].action + 10.0 * f64::EPSILON * w[0].action.abs())
        .count();
    traj.phi = phi;
    traj.psi = psi;
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Mountain-pass saddles with `psi != 0`.
    Nontrivial,
    /// `psi = 0` throughout.
    Trivial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSchedule {
    /// Decreasing, within (1, 2].
    pub alphas: Vec<f64>,
    /// Increasing positive integers; `eps = 1/k`.
    pub ks: Vec<u32>,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Energy bound `Lambda` for the monitor.
    pub energy_bound: f64,
    /// Perturbation exponent; the canonical one for each alpha if absent.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default = "default_branch")]
    pub branch: Branch,
    /// Eigenpairs requested per stage.
    #[serde(default = "default_spectral_count")]
    pub spectral_count: usize,
}

fn default_branch() -> Branch {
    Branch::Nontrivial
}

fn default_spectral_count() -> usize {
    8
}

impl ContinuationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.ks.is_empty() {
            return Err(Error::config("schedule", "ladders must be nonempty"));
        }
        if self.alphas.iter().any(|a| !(*a > 1.0 && *a <= 2.0)) {
            return Err(Error::config("schedule.alphas", "every alpha must lie in (1, 2]"));
        }
        if self.alphas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::config("schedule.alphas", "alpha ladder must be strictly decreasing"));
        }
        if self.ks.iter().any(|k| *k == 0) || self.ks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("schedule.ks", "k ladder must be strictly increasing positive integers"));
        }
        if !(self.energy_bound > 0.0) {
            return Err(Error::config("schedule.energy_bound", "energy bound must be positive"));
        }
        if self.spectral_count == 0 {
            return Err(Error::config("schedule.spectral_count", "must be at least 1"));
        }
        self.solver.validate()
    }
}

/// Bookkeeping for one `(alpha, k)` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub alpha: f64,
    pub k: u32,
    pub m_theta: Option<f64>,
    pub action: Option<f64>,
    /// `int |psi|^4`.
    pub psi_l4: Option<f64>,
    /// `E(phi, psi) = int (|d phi|^{2 alpha} + |psi|^4)`.
    pub monitor_energy: Option<f64>,
    pub bound_flag: bool,
    pub residual: Option<f64>,
    pub converged: bool,
    pub nontrivial: bool,
    pub lambda_plus: Option<f64>,
    /// Sup distance between this stage's map and the previous one.
    pub map_change: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuationReport {
    pub stages: Vec<StageRecord>,
    pub points: Vec<CriticalPoint>,
    pub energy_bound: f64,
    pub bound_violations: usize,
    /// Residuals of the last point for the unperturbed system (`eps = 0`).
    pub unperturbed_residuals: Option<ResidualNorms>,
}

/// `int |psi|^4`.
pub fn spinor_l4(domain: &SurfaceDomain, psi: &PlainSpinorField) -> f64 {
    domain.weight() * psi.modulus_sqr().iter().map(|m| m * m).sum::<f64>()
}

/// Monitored energy `int (|d phi|^{2 alpha} + |psi|^4)`.
pub fn monitor_energy(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField, alpha: f64) -> f64 {
    let q = fun::energy_density(domain, phi);
    domain.weight() * q.iter().map(|x| x.powf(alpha)).sum::<f64>() + spinor_l4(domain, psi)
}

fn run_stage(
    domain: &SurfaceDomain,
    schedule: &ContinuationSchedule,
    start: &MapField,
    previous: Option<&CriticalPoint>,
    alpha: f64,
    k: u32,
) -> Result<(CriticalPoint, f64)> {
    let cfg = &schedule.solver;
    let eps = 1.0 / k as f64;
    let action_cfg = match schedule.mu {
        Some(mu) => ActionConfig::with_exponent(alpha, eps, mu)?,
        None => ActionConfig::new(alpha, eps)?,
    };
    let min = minimize_alpha_energy(domain, start, alpha, cfg)?;
    let m_theta = min.action.total;
    if schedule.branch == Branch::Trivial {
        let zero = PlainSpinorField::zeros(domain, min.phi.ambient_dim());
        let cp = newton_solve(domain, &min.phi, &zero, &action_cfg, cfg)?;
        return Ok((cp, m_theta));
    }
    let data = spectral::dirac_spectrum(domain, &min.phi, schedule.spectral_count, spectral::default_zero_threshold(domain))?;
    let init = mountain_pass_init(domain, &min, &data, &action_cfg);
    let mut cp = match (init, previous) {
        (Ok(mp), _) => newton_solve(domain, &mp.phi, &mp.psi, &action_cfg, cfg)?,
        (Err(_), Some(prev)) => {
            let psi = transport_spinor(domain, &prev.phi, &min.phi, &prev.psi)?;
            newton_solve(domain, &min.phi, &psi, &action_cfg, cfg)?
        }
        (Err(e), None) => return Err(e),
    };
    cp.spectral = Some(SpectralSummary::from(&data));
    Ok((cp, m_theta))
}

/// Continuation through the `(alpha, k)` ladders, outer loop over alpha.
pub fn continuation_run(domain: &SurfaceDomain, schedule: &ContinuationSchedule, initial: &MapField) -> Result<ContinuationReport> {
    schedule.validate()?;
    check_class(domain, initial)?;
    let mut stages = Vec::new();
    let mut points: Vec<CriticalPoint> = Vec::new();
    let mut last_alpha = schedule.alphas[0];
    for &alpha in &schedule.alphas {
        for &k in &schedule.ks {
            let stage = stages.len();
            let previous = points.last();
            let start = previous.map_or(initial, |p| &p.phi);
            let mut attempt = run_stage(domain, schedule, start, previous, alpha, k);
            if attempt.is_err() && previous.is_some() {
                attempt = run_stage(domain, schedule, initial, None, alpha, k);
            }
            let mut rec = StageRecord {
                stage,
                alpha,
                k,
                m_theta: None,
                action: None,
                psi_l4: None,
                monitor_energy: None,
                bound_flag: false,
                residual: None,
                converged: false,
                nontrivial: false,
                lambda_plus: None,
                map_change: None,
                error: None,
            };
            match attempt {
                Ok((cp, m_theta)) => {
                    let energy = monitor_energy(domain, &cp.phi, &cp.psi, alpha);
                    rec.m_theta = Some(m_theta);
                    rec.action = Some(cp.action.total);
                    rec.psi_l4 = Some(spinor_l4(domain, &cp.psi));
                    rec.monitor_energy = Some(energy);
                    rec.bound_flag = energy > schedule.energy_bound;
                    rec.residual = Some(cp.residuals.combined);
                    rec.converged = cp.converged;
                    rec.nontrivial = cp.nontrivial;
                    rec.lambda_plus = cp.spectral.as_ref().and_then(|s| s.lambda_plus);
                    rec.map_change = points.last().map(|p| p.phi.sup_distance(&cp.phi));
                    if !cp.converged {
                        rec.error = Some(format!("Newton stopped at residual {:.3e}", cp.residuals.combined));
                    }
                    points.push(cp);
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            last_alpha = alpha;
            stages.push(rec);
        }
    }
    let unperturbed_residuals = match points.last() {
        Some(p) => {
            let mut cfg = ActionConfig::new(last_alpha, 0.0)?;
            if let Some(mu) = schedule.mu {
                cfg = ActionConfig::with_exponent(last_alpha, 0.0, mu)?;
            }
            Some(fun::residual_norms(domain, &p.phi, &p.psi, &cfg)?)
        }
        None => None,
    };
    let bound_violations = stages.iter().filter(|s| s.bound_flag).count();
    Ok(ContinuationReport {
        stages,
        points,
        energy_bound: schedule.energy_bound,
        bound_violations,
        unperturbed_residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SpinStructure;
    use crate::target::{FlatTorus2, Target};

    fn flat_domain(n: usize) -> SurfaceDomain {
        SurfaceDomain::new(n, 1.0, SpinStructure::from_signs(-1, -1).unwrap()).unwrap()
    }

    #[test]
    fn noisy_identity_relaxes_to_affine_energy() {
        let d = flat_domain(12);
        let phi0 = MapField::smooth_torus_map(&d, FlatTorus2::default(), [[1, 0], [0, 1]], 0.05, 3).unwrap();
        for alpha in [1.25, 2.0] {
            let cp = minimize_alpha_energy(&d, &phi0, alpha, &SolverConfig::default()).unwrap();
            let want = 0.5 * 3f64.powf(alpha);
            assert!((cp.action.total - want).abs() < 1e-8, "{} vs {want}", cp.action.total);
            assert_eq!(cp.class, HomotopyClass::IDENTITY);
        }
    }

    #[test]
    fn constant_class_relaxes_to_constant() {
        let d = flat_domain(8);
        let phi0 = MapField::smooth_torus_map(&d, FlatTorus2::default(), [[0, 0], [0, 0]], 0.05, 5).unwrap();
        let cp = minimize_alpha_energy(&d, &phi0, 1.5, &SolverConfig::default()).unwrap();
        assert!((cp.action.total - 0.5).abs() < 1e-8);
        let s = MapField::smooth_sphere_map(&d, 0.5, 2).unwrap();
        let cp = minimize_alpha_energy(&d, &s, 1.5, &SolverConfig::default()).unwrap();
        assert!((cp.action.total - 0.5).abs() < 1e-8);
    }

    #[test]
    fn pseudo_gradient_constant_is_checked() {
        let cfg = SolverConfig {
            pseudo_gradient_a: 2.0,
            ..SolverConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn mountain_pass_matches_closed_form() {
        let d = flat_domain(8);
        let phi = MapField::affine_torus(&d, FlatTorus2::default(), [[1, 0], [0, 1]], [0.0, 0.0]).unwrap();
        let min = minimize_alpha_energy(&d, &phi, 1.5, &SolverConfig::default()).unwrap();
        let data = spectral::dirac_spectrum(&d, &min.phi, 8, spectral::default_zero_threshold(&d)).unwrap();
        let k = 8.0;
        let cfg = ActionConfig::with_exponent(1.5, 1.0 / k, 4.0).unwrap();
        let mp = mountain_pass_init(&d, &min, &data, &cfg).unwrap();
        let e = data.e_plus.as_ref().unwrap();
        let lam = data.smallest_positive().unwrap();
        let e4 = spinor_l4(&d, e);
        let want = (lam * k * e.norm_sqr(&d) / (4.0 * e4)).sqrt();
        assert!((mp.radius - want).abs() < 1e-10 * want);
        assert!(mp.height > mp.base);
        let zero = cfg.with_epsilon(0.0).unwrap();
        assert!(matches!(mountain_pass_init(&d, &min, &data, &zero), Err(Error::NoTurnDown { .. })));
    }

    #[test]
    fn newton_from_mountain_pass_reaches_decoupled_solution() {
        let d = flat_domain(8);
        let phi = MapField::smooth_torus_map(&d, FlatTorus2::default(), [[1, 0], [0, 1]], 0.02, 9).unwrap();
        let min = minimize_alpha_energy(&d, &phi, 1.5, &SolverConfig::default()).unwrap();
        let data = spectral::dirac_spectrum(&d, &min.phi, 8, spectral::default_zero_threshold(&d)).unwrap();
        let k = 4.0;
        let cfg = ActionConfig::with_exponent(1.5, 1.0 / k, 4.0).unwrap();
        let mp = mountain_pass_init(&d, &min, &data, &cfg).unwrap();
        // Start off the ray so Newton has work to do.
        let mut psi = mp.psi.scaled(1.05);
        let bump = fun::random_tangent_spinor(&d, &mp.phi, 4);
        psi.axpy(0.01, &bump);
        let cp = newton_solve(&d, &mp.phi, &psi, &cfg, &SolverConfig::default()).unwrap();
        assert!(cp.converged, "{:?}", cp.history);
        assert!(cp.residuals.combined <= 1e-8);
        assert!(cp.nontrivial);
        assert!(cp.action.total > min.action.total);
    }

    #[test]
    fn newton_with_zero_spinor_stays_trivial() {
        let d = flat_domain(8);
        let phi = MapField::smooth_torus_map(&d, FlatTorus2::default(), [[1, 0], [0, 1]], 0.02, 1).unwrap();
        let cfg = ActionConfig::with_exponent(1.5, 0.25, 4.0).unwrap();
        let zero = PlainSpinorField::zeros(&d, 2);
        let cp = newton_solve(&d, &phi, &zero, &cfg, &SolverConfig::default()).unwrap();
        assert!(cp.converged);
        assert!(!cp.nontrivial);
        assert!((cp.action.total - 0.5 * 3f64.powf(1.5)).abs() < 1e-8);
    }

    #[test]
    fn flow_decreases_and_keeps_margins() {
        let d = flat_domain(8);
        let phi = MapField::smooth_torus_map(&d, FlatTorus2::default(), [[1, 0], [0, 1]], 0.05, 2).unwrap();
        let psi = fun::random_tangent_spinor(&d, &phi, 7);
        let cfg = ActionConfig::with_exponent(1.5, 0.25, 4.0).unwrap();
        let traj = pseudo_gradient_flow(&d, &phi, &psi, &cfg, &SolverConfig::default(), 1.0).unwrap();
        assert_eq!(traj.violations, 0);
        assert_eq!(traj.monotonicity_violations, 0);
        assert!(traj.decrease() > 0.0);
        let pred = traj.predicted_decrease();
        assert!((traj.decrease() - pred).abs() <= 0.05 * pred, "{} vs {pred}", traj.decrease());
    }

    #[test]
    fn sphere_flow_and_newton_on_coupled_system() {
        let d = SurfaceDomain::new(6, 1.0, SpinStructure::from_signs(-1, 1).unwrap()).unwrap();
        let phi = MapField::smooth_sphere_map(&d, 0.4, 3).unwrap();
        let cfg = ActionConfig::with_exponent(1.5, 0.05, 4.0).unwrap();
        let psi = fun::random_tangent_spinor(&d, &phi, 1).scaled(0.3);
        let traj = pseudo_gradient_flow(&d, &phi, &psi, &cfg, &SolverConfig::default(), 0.5).unwrap();
        assert_eq!(traj.violations, 0);
        assert_eq!(traj.monotonicity_violations, 0);
        assert_eq!(winding_of(&d, &traj.phi).unwrap(), HomotopyClass::Degree(0));
        let _ = Target::sphere();
    }
}
