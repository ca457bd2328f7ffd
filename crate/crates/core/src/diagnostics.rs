//! Verification instruments: energy and residual reports, concentration
//! scans, sampled minimax estimates, convexity and uniqueness experiments,
//! and numerical checks of the growth conditions on a perturbation.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::SurfaceDomain;
use crate::error::{Error, Result};
use crate::functional::{self as fun, ActionConfig, ActionValue, MapField, PerturbationHook, ResidualNorms};
use crate::solver::{self, CriticalPoint, SolverConfig, SpectralSummary};
use crate::spectral::{self, SpectralData, SpectralSign};
use crate::spin::{self, PlainSpinorField};
use crate::target::{FlatTorus2, HomotopyClass, Target, TargetManifold, MAX_AMBIENT};

/// Default concentration threshold.
pub const DEFAULT_EPS0: f64 = 0.1;
/// Thresholds reported alongside every scan.
pub const EPS0_SWEEP: [f64; 4] = [0.02, 0.05, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// Local Dirichlet energies `int_{B(x, r)} |d phi|^2` at every vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationScan {
    pub radius: f64,
    pub eps0: f64,
    pub centers: Vec<[f64; 2]>,
    pub energies: Vec<f64>,
    pub flags: Vec<bool>,
    pub flagged: usize,
    /// `int |d phi|^2` over the whole domain.
    pub total: f64,
    /// Flag counts for each threshold in [`EPS0_SWEEP`].
    pub sensitivity: Vec<(f64, usize)>,
}

impl ConcentrationScan {
    pub fn flagged_at(&self, eps0: f64) -> usize {
        self.energies.iter().filter(|e| **e >= eps0).count()
    }
}

pub fn concentration_scan(domain: &SurfaceDomain, phi: &MapField, radius: f64, eps0: f64) -> Result<ConcentrationScan> {
    if !(radius >= 2.0 * domain.h()) {
        return Err(Error::config(
            "diagnostics.radius",
            format!("radius {radius} is below two grid spacings ({})", 2.0 * domain.h()),
        ));
    }
    if !(eps0 > 0.0) {
        return Err(Error::config("diagnostics.eps0", "threshold must be positive"));
    }
    let q = fun::energy_density(domain, phi);
    let n = domain.n() as i64;
    let h = domain.h();
    let reach = (radius / h).floor() as i64;
    // Offsets inside the ball, each lattice point counted once.
    let mut offsets = Vec::new();
    for dj in -reach..=reach {
        for di in -reach..=reach {
            let d = ((di * di + dj * dj) as f64).sqrt() * h;
            if d <= radius {
                offsets.push((di.rem_euclid(n) as usize, dj.rem_euclid(n) as usize));
            }
        }
    }
    offsets.sort_unstable();
    offsets.dedup();
    let nu = domain.n();
    let w = domain.weight();
    let mut centers = Vec::with_capacity(domain.vertex_count());
    let mut energies = Vec::with_capacity(domain.vertex_count());
    for v in 0..domain.vertex_count() {
        let (i, j) = domain.coords(v);
        let e: f64 = offsets
            .iter()
            .map(|&(di, dj)| q[domain.index((i + di) % nu, (j + dj) % nu)])
            .sum::<f64>()
            * w;
        centers.push(domain.position(v));
        energies.push(e);
    }
    let flags: Vec<bool> = energies.iter().map(|e| *e >= eps0).collect();
    let flagged = flags.iter().filter(|f| **f).count();
    let total = w * q.iter().sum::<f64>();
    let mut scan = ConcentrationScan {
        radius,
        eps0,
        centers,
        energies,
        flags,
        flagged,
        total,
        sensitivity: Vec::new(),
    };
    scan.sensitivity = EPS0_SWEEP.iter().map(|&e| (e, scan.flagged_at(e))).collect();
    Ok(scan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimaxOptions {
    pub samples: usize,
    pub seed: u64,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub rho: Option<f64>,
}

impl Default for MinimaxOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 7,
            r1: None,
            r2: None,
            rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxEstimates {
    /// Largest sampled action on the boundary of `Q`.
    pub a_estimate: f64,
    /// Smallest sampled action on the positive sphere of radius `rho`.
    pub b_estimate: f64,
    pub m_theta: f64,
    pub r1: f64,
    pub r2: f64,
    pub rho: f64,
    pub samples: usize,
    pub lambda_plus: f64,
    /// `m_theta + lambda+ rho^2 / 2`.
    pub b_quadratic: f64,
    /// `a <= m_theta < b` on the samples.
    pub linking_holds: bool,
}

fn random_combination(domain: &SurfaceDomain, basis: &[&PlainSpinorField], rng: &mut ChaCha8Rng) -> PlainSpinorField {
    let mut out = basis[0].scaled(0.0);
    for b in basis {
        let c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        out.axpy_complex(c, b);
    }
    let _ = domain;
    out
}

fn with_h_half_norm(domain: &SurfaceDomain, psi: &PlainSpinorField, radius: f64) -> Result<PlainSpinorField> {
    let n = spin::h_half_norm(domain, psi)?;
    if n == 0.0 {
        return Ok(psi.clone());
    }
    Ok(psi.scaled(radius / n))
}

/// Sampled estimates of the linking levels around an alpha-energy minimizer.
pub fn minimax_estimates(
    domain: &SurfaceDomain,
    minimizer: &CriticalPoint,
    data: &SpectralData,
    action_cfg: &ActionConfig,
    opts: &MinimaxOptions,
) -> Result<MinimaxEstimates> {
    action_cfg.validate()?;
    let phi = &minimizer.phi;
    data.check_map(phi)?;
    let e = data.e_plus.as_ref().ok_or(Error::EmptyPositiveSubspace)?;
    let lambda_plus = data.lambda_plus.ok_or(Error::EmptyPositiveSubspace)?;
    let dir = data.lambda_plus_direction.as_ref().ok_or(Error::EmptyPositiveSubspace)?;
    let positive: Vec<&PlainSpinorField> = data
        .indices(SpectralSign::Positive)
        .into_iter()
        .map(|i| &data.eigenspinors[i])
        .collect();
    let lower: Vec<&PlainSpinorField> = data
        .indices(SpectralSign::Negative)
        .into_iter()
        .chain(data.indices(SpectralSign::Zero))
        .map(|i| &data.eigenspinors[i])
        .collect();
    if lower.is_empty() {
        return Err(Error::Experiment(
            "spectral subspaces too small to sample: no negative or null eigenspinors resolved".into(),
        ));
    }
    let m_theta = fun::alpha_energy(domain, phi, action_cfg.alpha);
    let value = |psi: &PlainSpinorField| -> Result<f64> { Ok(fun::action(domain, phi, psi, action_cfg)?.total) };
    let slack = 1e-12 * m_theta.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let peak = if action_cfg.epsilon > 0.0 {
        solver::mountain_pass_init(domain, minimizer, data, action_cfg).ok().map(|mp| mp.radius)
    } else {
        None
    };

    let r2 = match opts.r2 {
        Some(r) => r,
        None => match peak {
            Some(r) => {
                let mut r2 = 2.0 * r;
                for _ in 0..60 {
                    if value(&e.scaled(r2))? < m_theta - slack {
                        break;
                    }
                    r2 *= 2.0;
                }
                2.0 * r2
            }
            None => 1.0,
        },
    };
    // R1: grow until the lateral face of Q sits below m_theta on probes.
    let r1 = match opts.r1 {
        Some(r) => r,
        None => {
            let mut r1 = r2;
            let mut probe = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa1);
            for _ in 0..40 {
                let mut ok = true;
                for i in 0..64 {
                    let w = with_h_half_norm(domain, &random_combination(domain, &lower, &mut probe), r1)?;
                    let mut psi = w;
                    psi.axpy(r2 * i as f64 / 63.0, e);
                    if value(&psi)? > m_theta + slack {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    break;
                }
                r1 *= 2.0;
            }
            r1
        }
    };
    // rho: shrink until the positive sphere sits above m_theta on probes.
    let rho = match opts.rho {
        Some(r) => r,
        None => match peak {
            Some(r) => {
                let mut rho = 0.5 * r;
                let mut probe = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb2);
                for _ in 0..60 {
                    let mut ok = value(&dir.scaled(rho))? > m_theta && value(&e.scaled(rho))? > m_theta;
                    for _ in 0..64 {
                        if !ok {
                            break;
                        }
                        let s = with_h_half_norm(domain, &random_combination(domain, &positive, &mut probe), rho)?;
                        ok = value(&s)? > m_theta;
                    }
                    if ok {
                        break;
                    }
                    rho *= 0.5;
                }
                rho
            }
            None => 1.0,
        },
    };
    for (key, v) in [("minimax.r1", r1), ("minimax.r2", r2), ("minimax.rho", rho)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(key, format!("radius must be positive, got {v}")));
        }
    }

    let samples = opts.samples.max(1);
    let mut a = value(&e.scaled(0.0))?;
    for i in 1..samples {
        let u: f64 = rng.random_range(0.0..=1.0);
        let w = random_combination(domain, &lower, &mut rng);
        let psi = match i % 3 {
            0 => with_h_half_norm(domain, &w, r1 * u)?,
            1 => {
                let mut p = with_h_half_norm(domain, &w, r1 * u)?;
                p.axpy(r2, e);
                p
            }
            _ => {
                let mut p = with_h_half_norm(domain, &w, r1)?;
                p.axpy(r2 * u, e);
                p
            }
        };
        a = a.max(value(&psi)?);
    }
    let mut b = value(&dir.scaled(rho))?.min(value(&e.scaled(rho))?);
    for _ in 2..samples {
        let s = with_h_half_norm(domain, &random_combination(domain, &positive, &mut rng), rho)?;
        b = b.min(value(&s)?);
    }
    Ok(MinimaxEstimates {
        a_estimate: a,
        b_estimate: b,
        m_theta,
        r1,
        r2,
        rho,
        samples,
        lambda_plus,
        b_quadratic: m_theta + 0.5 * lambda_plus * rho * rho,
        linking_holds: a <= m_theta + slack && m_theta < b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub verdict: Verdict,
    pub trials: usize,
    pub energies: Vec<f64>,
    /// Largest pairwise vertex deviation after mean-centering.
    pub max_deviation: f64,
    /// `max_t |E(f_t) - E(f_0)|` along the homotopy between two limits.
    pub homotopy_energy_spread: f64,
    /// Largest departure of a vertex path from constant-speed geodesic motion.
    pub geodesic_defect: f64,
    pub error: Option<String>,
}

const HOMOTOPY_TIMES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn centered(phi: &MapField) -> Vec<f64> {
    let l = phi.ambient_dim();
    let nv = phi.values.len() / l;
    let mut mean = [0.0; MAX_AMBIENT];
    for v in 0..nv {
        for c in 0..l {
            mean[c] += phi.values[v * l + c] / nv as f64;
        }
    }
    phi.values.iter().enumerate().map(|(k, x)| x - mean[k % l]).collect()
}

fn interpolate(phi0: &MapField, phi1: &MapField, t: f64) -> MapField {
    MapField {
        target: phi0.target,
        class: phi0.class,
        values: phi0.values.iter().zip(&phi1.values).map(|(a, b)| a + t * (b - a)).collect(),
    }
}

/// Independent minimizations in one class must agree up to translation.
pub fn uniqueness_experiment(
    domain: &SurfaceDomain,
    target: Target,
    class: HomotopyClass,
    alpha: f64,
    trials: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<UniquenessReport> {
    let mut report = UniquenessReport {
        verdict: Verdict::NotApplicable,
        trials,
        energies: Vec::new(),
        max_deviation: 0.0,
        homotopy_energy_spread: 0.0,
        geodesic_defect: 0.0,
        error: None,
    };
    let torus: FlatTorus2 = match target {
        Target::Torus(t) => t,
        Target::Sphere(_) => {
            report.error = Some("target curvature is positive; uniqueness needs a nonpositively curved target".into());
            return Ok(report);
        }
    };
    let a = class
        .winding_matrix()
        .ok_or_else(|| Error::config("class", "torus maps need a winding matrix"))?;
    if trials < 2 {
        return Err(Error::config("uniqueness.trials", "need at least two trials"));
    }
    let mut limits = Vec::with_capacity(trials);
    for i in 0..trials {
        let start = MapField::smooth_torus_map(domain, torus, a, 0.05, seed.wrapping_add(i as u64))?;
        match solver::minimize_alpha_energy(domain, &start, alpha, cfg) {
            Ok(cp) => {
                report.energies.push(cp.action.total);
                limits.push(cp.phi);
            }
            Err(e) => {
                report.verdict = Verdict::Fail;
                report.error = Some(format!("trial {i}: {e}"));
                return Ok(report);
            }
        }
    }
    let centers: Vec<Vec<f64>> = limits.iter().map(centered).collect();
    let l = 2;
    for i in 0..trials {
        for j in i + 1..trials {
            let dev = centers[i]
                .chunks(l)
                .zip(centers[j].chunks(l))
                .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
                .fold(0.0, f64::max);
            report.max_deviation = report.max_deviation.max(dev);
        }
    }
    let (f0, f1) = (&limits[0], &limits[1]);
    let e0 = fun::alpha_energy(domain, f0, alpha);
    for t in HOMOTOPY_TIMES {
        let ft = interpolate(f0, f1, t);
        report.homotopy_energy_spread = report
            .homotopy_energy_spread
            .max((fun::alpha_energy(domain, &ft, alpha) - e0).abs());
        for v in 0..domain.vertex_count() {
            let full = target.distance(f0.point(v), f1.point(v));
            let part = target.distance(f0.point(v), ft.point(v));
            report.geodesic_defect = report.geodesic_defect.max((part - t * full).abs());
        }
    }
    report.verdict = Verdict::from_bool(
        report.max_deviation <= 1e-6 && report.homotopy_energy_spread <= 1e-8 && report.geodesic_defect <= 1e-10,
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub verdict: Verdict,
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    pub second_differences: Vec<f64>,
    pub min_second_difference: f64,
    /// Threshold `-1e-8 * scale` the second differences are held to.
    pub tolerance: f64,
}

/// Second differences of `t -> E^alpha(f_t)` along the vertexwise geodesic
/// homotopy between two maps of the same class.
pub fn convexity_experiment(
    domain: &SurfaceDomain,
    phi0: &MapField,
    phi1: &MapField,
    alpha: f64,
    steps: usize,
) -> Result<ConvexityReport> {
    if !phi0.target.is_flat() {
        return Ok(ConvexityReport {
            verdict: Verdict::NotApplicable,
            times: Vec::new(),
            energies: Vec::new(),
            second_differences: Vec::new(),
            min_second_difference: 0.0,
            tolerance: 0.0,
        });
    }
    if phi0.class != phi1.class || phi0.target != phi1.target {
        return Err(Error::ClassMismatch {
            expected: phi0.class.to_string(),
            found: phi1.class.to_string(),
        });
    }
    if phi0.values.len() != phi1.values.len() {
        return Err(Error::Shape {
            what: "homotopy endpoint",
            expected: phi0.values.len(),
            found: phi1.values.len(),
        });
    }
    if steps < 3 {
        return Err(Error::config("convexity.steps", "need at least three steps"));
    }
    let times: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
    let energies: Vec<f64> = times
        .iter()
        .map(|&t| fun::alpha_energy(domain, &interpolate(phi0, phi1, t), alpha))
        .collect();
    let second_differences: Vec<f64> = energies.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect();
    let min_second_difference = second_differences.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = energies.iter().fold(1.0f64, |m, e| m.max(e.abs()));
    let tolerance = 1e-8 * scale;
    Ok(ConvexityReport {
        verdict: Verdict::from_bool(min_second_difference >= -tolerance),
        times,
        energies,
        second_differences,
        min_second_difference,
        tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthOptions {
    /// Random `(phi, direction)` pairs per magnitude.
    pub samples: usize,
    pub seed: u64,
    /// Exponent the perturbation is configured with, if any.
    pub mu: Option<f64>,
    /// Used for the informational (F6) range `3 < r <= 2 + 2/alpha`.
    pub alpha: f64,
}

impl Default for GrowthOptions {
    fn default() -> Self {
        Self {
            samples: 16,
            seed: 11,
            mu: None,
            alpha: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    pub verdict: Verdict,
    /// Whether the condition enters the overall verdict.
    pub required: bool,
    pub measured: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub hook: String,
    pub verdict: Verdict,
    pub conditions: Vec<ConditionResult>,
    /// Log-log slope of `|F_psi|` over `|psi| in [1, 1e3]`.
    pub psi_gradient_exponent: f64,
    /// Smallest `<F_psi, psi> / F` over the large-`|psi|` samples.
    pub fitted_mu: Option<f64>,
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect()
}

/// Numerical sampling of the growth conditions (F1)-(F7) on a hook.
pub fn growth_condition_check(hook: &dyn PerturbationHook, target: Target, opts: &GrowthOptions) -> Result<GrowthReport> {
    if opts.samples == 0 {
        return Err(Error::config("growth.samples", "need at least one sample"));
    }
    let l = target.ambient_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut points = Vec::with_capacity(opts.samples);
    let mut dirs = Vec::with_capacity(opts.samples);
    let mut p = [0.0; MAX_AMBIENT];
    for _ in 0..opts.samples {
        let raw: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw = if raw.iter().all(|x| *x == 0.0) { vec![1.0; l] } else { raw };
        target.project(&raw, &mut p[..l])?;
        points.push(p[..l].to_vec());
        let mut d: Vec<Complex64> = (0..2 * l)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let n = d.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        d.iter_mut().for_each(|z| *z /= n);
        dirs.push(d);
    }
    let mut gpsi = vec![Complex64::new(0.0, 0.0); 2 * l];
    let mut gphi = vec![0.0; l];
    // Per magnitude: (min F, max |F_psi|, max |F_phi|, min <F_psi, psi>/F, max F/|psi|^2).
    let mut eval = |m: f64| -> Result<(f64, f64, f64, f64, f64)> {
        let mut out = (f64::INFINITY, 0.0f64, 0.0f64, f64::INFINITY, f64::NEG_INFINITY);
        for (pt, d) in points.iter().zip(&dirs) {
            let xi: Vec<Complex64> = d.iter().map(|z| z * m).collect();
            let f = hook.density(pt, &xi);
            hook.grad_psi(pt, &xi, &mut gpsi);
            hook.grad_phi(pt, &xi, &mut gphi);
            if !f.is_finite() || gpsi.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) || gphi.iter().any(|x| !x.is_finite()) {
                return Err(Error::Hook(format!("{} returned a non-finite value at |psi| = {m:e}", hook.name())));
            }
            let gp = gpsi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let gf = gphi.iter().map(|x| x * x).sum::<f64>().sqrt();
            let pair: f64 = gpsi.iter().zip(&xi).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
            out.0 = out.0.min(f);
            out.1 = out.1.max(gp);
            out.2 = out.2.max(gf);
            out.3 = out.3.min(if f > 0.0 { pair / f } else { f64::NEG_INFINITY });
            out.4 = out.4.max(f / (m * m));
        }
        Ok(out)
    };
    let large = logspace(0.0, 3.0, 25);
    let small = logspace(-6.0, -1.0, 21);
    let big: Vec<_> = large.iter().map(|&m| eval(m)).collect::<Result<_>>()?;
    let tiny: Vec<_> = small.iter().map(|&m| eval(m)).collect::<Result<_>>()?;
    let lx: Vec<f64> = large.iter().map(|m| m.ln()).collect();
    let fit = |ys: Vec<f64>| -> Option<f64> {
        if ys.iter().all(|y| *y > 0.0) {
            Some(slope(&lx, &ys.iter().map(|y| y.ln()).collect::<Vec<_>>()))
        } else if ys.iter().all(|y| *y == 0.0) {
            None
        } else {
            Some(f64::INFINITY)
        }
    };
    let psi_exp = fit(big.iter().map(|r| r.1).collect()).unwrap_or(f64::NEG_INFINITY);
    let phi_exp = fit(big.iter().map(|r| r.2).collect());
    let fitted_mu = big.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    let fitted_mu = fitted_mu.is_finite().then_some(fitted_mu);
    let min_f = big.iter().chain(&tiny).map(|r| r.0).fold(f64::INFINITY, f64::min);

    let mut conditions = Vec::new();
    let p_fit = psi_exp + 1.0;
    conditions.push(ConditionResult {
        name: "F1".into(),
        verdict: Verdict::from_bool(p_fit <= 4.0 + 1e-3),
        required: true,
        measured: Some(psi_exp),
        detail: format!("|F_psi| grows like |psi|^{psi_exp:.4}; needs p - 1 <= 3"),
    });
    let f2_ok = fitted_mu.is_some_and(|m| m > 2.0) && big.iter().all(|r| r.0 > 0.0);
    let mut detail = match fitted_mu {
        Some(m) => format!("min <F_psi, psi>/F = {m:.6} on |psi| in [1, 1e3]"),
        None => "F vanishes on large spinors".into(),
    };
    if let (Some(m), Some(mu)) = (fitted_mu, opts.mu) {
        detail.push_str(&format!(", configured mu = {mu}, difference {:.2e}", (m - mu).abs()));
    }
    conditions.push(ConditionResult {
        name: "F2".into(),
        verdict: Verdict::from_bool(f2_ok),
        required: true,
        measured: fitted_mu,
        detail,
    });
    conditions.push(ConditionResult {
        name: "F3".into(),
        verdict: Verdict::from_bool(phi_exp.is_none_or(|q| q < 4.0)),
        required: true,
        measured: phi_exp,
        detail: match phi_exp {
            Some(q) => format!("|F_phi| grows like |psi|^{q:.4}; needs q < 4"),
            None => "F_phi vanishes identically on the samples".into(),
        },
    });
    conditions.push(ConditionResult {
        name: "F4".into(),
        verdict: Verdict::from_bool(min_f >= 0.0),
        required: true,
        measured: Some(min_f),
        detail: format!("smallest sampled F = {min_f:.3e}"),
    });
    let ratios: Vec<f64> = tiny.iter().map(|r| r.4).collect();
    let sx: Vec<f64> = small.iter().map(|m| m.ln()).collect();
    let (f5_ok, f5_measure) = if ratios.iter().all(|r| *r == 0.0) {
        (true, None)
    } else if ratios.iter().all(|r| *r > 0.0) {
        let s = slope(&sx, &ratios.iter().map(|r| r.ln()).collect::<Vec<_>>());
        (s > 1e-3 && ratios[0] < ratios[ratios.len() - 1], Some(s))
    } else {
        (false, None)
    };
    conditions.push(ConditionResult {
        name: "F5".into(),
        verdict: Verdict::from_bool(f5_ok),
        required: true,
        measured: f5_measure,
        detail: format!(
            "F/|psi|^2 = {:.3e} at |psi| = 1e-6 and {:.3e} at 1e-1",
            ratios[0],
            ratios[ratios.len() - 1]
        ),
    });
    let r_hi = 2.0 + 2.0 / opts.alpha;
    conditions.push(ConditionResult {
        name: "F6".into(),
        verdict: Verdict::from_bool(p_fit > 3.0 && p_fit <= r_hi + 1e-3),
        required: false,
        measured: Some(p_fit),
        detail: format!("fitted r = {p_fit:.4} against (3, {r_hi:.4}]"),
    });
    conditions.push(ConditionResult {
        name: "F7".into(),
        verdict: Verdict::from_bool(phi_exp.is_none_or(|q| q > 2.0)),
        required: false,
        measured: phi_exp,
        detail: "needs |F_phi| <= C |psi|^q with q > 2".into(),
    });
    let verdict = Verdict::from_bool(conditions.iter().filter(|c| c.required).all(|c| c.verdict == Verdict::Pass));
    Ok(GrowthReport {
        hook: hook.name(),
        verdict,
        conditions,
        psi_gradient_exponent: psi_exp,
        fitted_mu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub alpha_energy: f64,
    pub dirichlet_energy: f64,
    pub psi_l4: f64,
    /// `int (|d phi|^{2 alpha} + |psi|^4)`.
    pub monitor_energy: f64,
    pub action: ActionValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub directions: usize,
    pub max_relative_error: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_fingerprint: u64,
    pub seed: u64,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedVerdict {
    pub name: String,
    pub verdict: Verdict,
    /// Non-finite values are written as JSON `null` and read back as NaN.
    #[serde(deserialize_with = "null_as_nan")]
    pub measured: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub energies: EnergyReport,
    pub residuals: ResidualNorms,
    pub lambda_plus: Option<f64>,
    pub spectrum: Option<SpectralSummary>,
    pub spectrum_error: Option<String>,
    pub concentration: ConcentrationScan,
    pub gradient_check: GradientCheck,
    pub verdicts: Vec<NamedVerdict>,
    pub provenance: Provenance,
}

impl DiagnosticsReport {
    pub fn verdict(&self) -> Verdict {
        Verdict::from_bool(self.verdicts.iter().all(|v| v.verdict != Verdict::Fail))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseOptions {
    /// Ball radius of the concentration scan; `max(side_length / 8, 2h)` if absent.
    pub radius: Option<f64>,
    pub eps0: f64,
    /// Eigenpairs for `lambda+`; zero skips the spectrum.
    pub spectral_count: usize,
    pub gradient_directions: usize,
    pub fd_step: f64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            radius: None,
            eps0: DEFAULT_EPS0,
            spectral_count: 8,
            gradient_directions: 4,
            fd_step: 1e-4,
        }
    }
}

/// Energies, residuals, `lambda+`, a concentration scan and a gradient
/// check at one state.
pub fn diagnose(
    domain: &SurfaceDomain,
    phi: &MapField,
    psi: &PlainSpinorField,
    action_cfg: &ActionConfig,
    opts: &DiagnoseOptions,
    provenance: Provenance,
) -> Result<DiagnosticsReport> {
    action_cfg.validate()?;
    let action = fun::action(domain, phi, psi, action_cfg)?;
    let energies = EnergyReport {
        alpha_energy: action.alpha_energy,
        dirichlet_energy: fun::dirichlet_energy(domain, phi),
        psi_l4: solver::spinor_l4(domain, psi),
        monitor_energy: solver::monitor_energy(domain, phi, psi, action_cfg.alpha),
        action,
    };
    let residuals = fun::residual_norms(domain, phi, psi, action_cfg)?;
    let (spectrum, spectrum_error) = if opts.spectral_count == 0 {
        (None, None)
    } else {
        match spectral::dirac_spectrum(domain, phi, opts.spectral_count, spectral::default_zero_threshold(domain)) {
            Ok(d) => (Some(SpectralSummary::from(&d)), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let radius = opts.radius.unwrap_or((domain.side_length() / 8.0).max(2.0 * domain.h()));
    let concentration = concentration_scan(domain, phi, radius, opts.eps0)?;

    let gh = fun::horizontal_gradient(domain, phi, psi, action_cfg)?;
    let gv = fun::vertical_residual(domain, phi, psi, action_cfg)?;
    // Errors are relative to |grad| |direction|, the largest possible pairing.
    let gh_norm = fun::tangent_norm(domain, &gh);
    let gv_norm = gv.norm(domain);
    let rel = |err: f64, scale: f64| if scale > 0.0 { err / scale } else { err };
    let mut worst = 0.0f64;
    for k in 0..opts.gradient_directions {
        let x = fun::random_tangent_field(domain, phi, provenance.seed.wrapping_add(k as u64));
        let an = fun::tangent_dot(domain, &gh, &x);
        let fd = fun::fd::horizontal(domain, phi, psi, action_cfg, &x, opts.fd_step)?;
        worst = worst.max(rel((an - fd).abs(), gh_norm * fun::tangent_norm(domain, &x)));
        let y = fun::random_tangent_spinor(domain, phi, provenance.seed.wrapping_add(1000 + k as u64));
        let an = gv.dot_re(domain, &y);
        let fd = fun::fd::vertical(domain, phi, psi, action_cfg, &y, opts.fd_step)?;
        worst = worst.max(rel((an - fd).abs(), gv_norm * y.norm(domain)));
    }
    let gradient_check = GradientCheck {
        directions: opts.gradient_directions,
        max_relative_error: worst,
        verdict: Verdict::from_bool(worst <= 1e-6),
    };
    let mut verdicts = vec![NamedVerdict {
        name: "gradient_check".into(),
        verdict: gradient_check.verdict,
        measured: worst,
        tolerance: 1e-6,
    }];
    if let Some(lp) = spectrum.as_ref().and_then(|s| s.lambda_plus) {
        verdicts.push(NamedVerdict {
            name: "lambda_plus_positive".into(),
            verdict: Verdict::from_bool(lp > 0.0),
            measured: lp,
            tolerance: 0.0,
        });
    }
    Ok(DiagnosticsReport {
        energies,
        residuals,
        lambda_plus: spectrum.as_ref().and_then(|s| s.lambda_plus),
        spectrum,
        spectrum_error,
        concentration,
        gradient_check,
        verdicts,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SpinStructure;
    use crate::functional::Perturbation;

    fn unit(n: usize) -> SurfaceDomain {
        SurfaceDomain::new(n, 1.0, SpinStructure::from_signs(-1, -1).unwrap()).unwrap()
    }

    #[test]
    fn scan_examples() {
        let d = unit(32);
        let c = MapField::constant(&d, Target::torus(), &[0.2, 0.3]).unwrap();
        let s = concentration_scan(&d, &c, 0.25, 0.1).unwrap();
        assert!(s.energies.iter().all(|e| *e == 0.0) && s.flagged == 0);
        let id = MapField::affine_torus(&d, FlatTorus2::default(), [[1, 0], [0, 1]], [0.0, 0.0]).unwrap();
        let s = concentration_scan(&d, &id, 0.25, 0.1).unwrap();
        let want = 2.0 * std::f64::consts::PI * 0.0625;
        assert!(s.energies.iter().all(|e| (e - want).abs() < 2.0 * 2.0 * std::f64::consts::PI * 0.25 * d.h()));
        assert!(matches!(concentration_scan(&d, &id, 0.01, 0.1), Err(Error::Config { .. })));
        let counts: Vec<usize> = s.sensitivity.iter().map(|x| x.1).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bubble_flags_grow_as_scale_shrinks() {
        let d = unit(64);
        let counts: Vec<usize> = [0.2, 0.1, 0.06, 0.04]
            .iter()
            .map(|&s| {
                let b = MapField::sphere_bubble(&d, [0.5, 0.5], s, 0.45).unwrap();
                concentration_scan(&d, &b, 0.1, 10.0).unwrap().flagged
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[1] > w[0]), "{counts:?}");
    }

    #[test]
    fn convexity_and_uniqueness_on_the_torus() {
        let d = unit(8);
        let a = MapField::affine_torus(&d, FlatTorus2::default(), [[1, 0], [0, 1]], [0.0, 0.0]).unwrap();
        let b = MapField::smooth_torus_map(&d, FlatTorus2::default(), [[1, 0], [0, 1]], 0.1, 4).unwrap();
        let r = convexity_experiment(&d, &a, &b, 1.5, 11).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        let r = convexity_experiment(&d, &a, &a, 1.5, 11).unwrap();
        assert!(r.second_differences.iter().all(|x| *x == 0.0));
        let r = convexity_experiment(&d, &a, &b, 1.0, 11).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        let c = MapField::constant(&d, Target::torus(), &[0.0, 0.0]).unwrap();
        assert!(matches!(convexity_experiment(&d, &a, &c, 1.5, 11), Err(Error::ClassMismatch { .. })));

        let u = uniqueness_experiment(&d, Target::torus(), HomotopyClass::IDENTITY, 1.5, 3, 1, &SolverConfig::default()).unwrap();
        assert_eq!(u.verdict, Verdict::Pass, "{u:?}");
        let u = uniqueness_experiment(&d, Target::sphere(), HomotopyClass::Degree(0), 1.5, 3, 1, &SolverConfig::default()).unwrap();
        assert_eq!(u.verdict, Verdict::NotApplicable);
    }

    #[derive(Debug)]
    struct Quadratic(f64);

    impl PerturbationHook for Quadratic {
        fn name(&self) -> String {
            format!("{}|psi|^2", self.0)
        }
        fn density(&self, _p: &[f64], xi: &[Complex64]) -> f64 {
            self.0 * xi.iter().map(|z| z.norm_sqr()).sum::<f64>()
        }
        fn grad_psi(&self, _p: &[f64], xi: &[Complex64], out: &mut [Complex64]) {
            for (o, z) in out.iter_mut().zip(xi) {
                *o = z * (2.0 * self.0);
            }
        }
        fn grad_phi(&self, _p: &[f64], _xi: &[Complex64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    #[test]
    fn growth_conditions() {
        let opts = GrowthOptions {
            mu: Some(4.0),
            ..GrowthOptions::default()
        };
        let r = growth_condition_check(&Perturbation::canonical(4.0), Target::sphere(), &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.psi_gradient_exponent - 3.0).abs() < 1e-3);
        assert!((r.fitted_mu.unwrap() - 4.0).abs() < 1e-3);
        let r = growth_condition_check(&Quadratic(1.0), Target::sphere(), &opts).unwrap();
        let f5 = r.conditions.iter().find(|c| c.name == "F5").unwrap();
        assert_eq!(f5.verdict, Verdict::Fail);
        let negative = Perturbation::Power {
            coefficient: -1.0,
            exponent: 4.0,
        };
        let r = growth_condition_check(&negative, Target::sphere(), &opts).unwrap();
        let failing: Vec<&str> = r
            .conditions
            .iter()
            .filter(|c| c.required && c.verdict == Verdict::Fail)
            .map(|c| c.name.as_str())
            .collect();
        assert!(failing.contains(&"F4") && failing.contains(&"F5"), "{failing:?}");
        let r = growth_condition_check(&Quadratic(-1.0), Target::sphere(), &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let f4 = r.conditions.iter().find(|c| c.name == "F4").unwrap();
        assert_eq!(f4.verdict, Verdict::Fail);
    }

    #[test]
    fn minimax_sandwich_and_quadratic_b() {
        let d = unit(8);
        let phi = MapField::affine_torus(&d, FlatTorus2::default(), [[1, 0], [0, 1]], [0.0, 0.0]).unwrap();
        let min = solver::minimize_alpha_energy(&d, &phi, 1.5, &SolverConfig::default()).unwrap();
        let data = spectral::dirac_spectrum(&d, &min.phi, 8, spectral::default_zero_threshold(&d)).unwrap();
        let cfg = ActionConfig::with_exponent(1.5, 0.25, 4.0).unwrap();
        let opts = MinimaxOptions {
            samples: 200,
            ..MinimaxOptions::default()
        };
        let est = minimax_estimates(&d, &min, &data, &cfg, &opts).unwrap();
        assert!(est.linking_holds, "{est:?}");
        let zero = cfg.with_epsilon(0.0).unwrap();
        let est = minimax_estimates(&d, &min, &data, &zero, &opts).unwrap();
        assert!((est.b_estimate - est.b_quadratic).abs() < 1e-8);
    }

    #[test]
    fn diagnose_is_deterministic() {
        let d = unit(8);
        let phi = MapField::smooth_torus_map(&d, FlatTorus2::default(), [[1, 0], [0, 1]], 0.05, 2).unwrap();
        let psi = fun::random_tangent_spinor(&d, &phi, 3);
        let cfg = ActionConfig::with_exponent(1.5, 0.1, 4.0).unwrap();
        let prov = Provenance {
            config_fingerprint: 1,
            seed: 5,
        };
        let a = diagnose(&d, &phi, &psi, &cfg, &DiagnoseOptions::default(), prov.clone()).unwrap();
        let b = diagnose(&d, &phi, &psi, &cfg, &DiagnoseOptions::default(), prov).unwrap();
        assert_eq!(serde_json_like(&a), serde_json_like(&b));
        assert_eq!(a.gradient_check.verdict, Verdict::Pass, "{:?}", a.gradient_check);
    }

    fn serde_json_like(r: &DiagnosticsReport) -> String {
        format!("{r:?}")
    }
}
